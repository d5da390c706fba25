use super::{GradSink, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{strides, Real, Tensor};

/// Copies `src` (with `shape`) into permuted order: `out.shape[i] = shape[perm[i]]`.
fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let r = out_shape.len();
    if r == 0 {
        return (out_shape, src.to_vec());
    }
    // Innermost dim handled as a strided run.
    let inner = out_shape[r - 1];
    let inner_stride = src_strides[r - 1];
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    let outer: usize = out_shape[..r - 1].iter().product();
    for _ in 0..outer {
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        let mut d = r - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn check_perm(perm: &[usize], rank: usize) -> bool {
    let mut seen = vec![false; rank];
    perm.len() == rank
        && perm.iter().all(|&p| {
            let ok = p < rank && !seen[p];
            if ok {
                seen[p] = true;
            }
            ok
        })
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        let n: usize = shape.iter().product();
        if n != xv.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", xv.shape()),
            ));
        }
        let value = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.tape.record(value, Op::Reshape { x: self.id }, &[self.id]))
    }

    /// Reorders dimensions; `out.shape[i] = in.shape[perm[i]]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        if !check_perm(perm, xv.rank()) {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", xv.rank()),
            ));
        }
        let (shape, data) = permute_data(xv.data(), xv.shape(), perm);
        Ok(self.tape.record(
            Tensor::new(shape, data)?,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Swaps the two dims of a matrix.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        self.permute(&[1, 0])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, T> {
        let v = self.value().sum();
        self.tape.count_flops(self.numel());
        self.tape
            .record(Tensor::scalar(v), Op::Sum { x: self.id }, &[self.id])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(shape_err(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..][..inner];
                for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        self.tape.count_flops(xv.numel());
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(self.tape.record(
            Tensor::new(out_shape, out)?,
            Op::SumAxis { x: self.id, axis },
            &[self.id],
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let len = self.shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }
}

pub(super) fn concat<'t, T: Real>(
    tape: &'t Tape<T>,
    xs: &[Var<'t, T>],
    axis: usize,
) -> Result<Var<'t, T>> {
    let first = xs
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs"))?
        .value();
    let base = first.shape().to_vec();
    if axis >= base.len() {
        return Err(shape_err(
            "concat",
            format!("axis {axis} out of range for {base:?}"),
        ));
    }
    let values: Vec<_> = xs.iter().map(|x| x.value()).collect();
    for v in &values {
        let s = v.shape();
        let agrees = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !agrees {
            return Err(shape_err(
                "concat",
                format!("{s:?} does not match {base:?} off axis {axis}"),
            ));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total_len: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_len * inner);
    for o in 0..outer {
        for v in &values {
            let chunk = v.shape()[axis] * inner;
            out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = base;
    shape[axis] = total_len;
    let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
    Ok(tape.record(
        Tensor::new(shape, out)?,
        Op::Concat {
            xs: ids.clone(),
            axis,
        },
        &ids,
    ))
}

pub(super) fn concat_backward<T: Real>(
    xs: &[usize],
    axis: usize,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    let shape = g.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total = shape[axis] * inner;
    let mut offset = 0;
    for &id in xs {
        let len = sink.value(id).shape()[axis] * inner;
        let off = offset;
        sink.add_with(id, |gx| {
            for o in 0..outer {
                let src = &g.data()[o * total + off..][..len];
                for (a, &b) in gx[o * len..][..len].iter_mut().zip(src) {
                    *a += b;
                }
            }
        });
        offset += len;
    }
}

pub(super) fn permute_backward<T: Real>(
    x: usize,
    perm: &[usize],
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) -> Result<()> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let (shape, data) = permute_data(g.data(), g.shape(), &inv);
    sink.add(x, Tensor::new(shape, data)?);
    Ok(())
}

pub(super) fn sum_axis_backward<T: Real>(
    x: usize,
    axis: usize,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    let shape = sink.value(x).shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    sink.add_with(x, |gx| {
        for o in 0..outer {
            let src = &g.data()[o * inner..][..inner];
            for l in 0..len {
                for (a, &b) in gx[(o * len + l) * inner..][..inner].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn permute_round_trip() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        assert_eq!(p.value().at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value().data(), x.value().data());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_middle_axis() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_fn([2, 1, 2], |i| i as f64));
        let b = tape.param(Tensor::from_fn([2, 2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(
            c.value().data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]
        );
        let w = tape.constant(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let g = tape.backward(c.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 6.0, 7.0]);
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn sum_axis_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 3], |i| i as f64));
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(x.sum_axis(1).unwrap().value().data(), &[3.0, 12.0]);
        assert_eq!(x.mean().item(), 2.5);
    }
}
