//! Parameters and the small layers every module is assembled from.
//!
//! Modules never own tensors. They hold [`ParamId`]s into a [`ParamStore`];
//! a forward pass binds the store to a tape ([`ParamStore::bind`]) and looks
//! each parameter up by id. This keeps model definitions independent of the
//! element type, so the same network runs in `f32` for training and in `f64`
//! for gradient checks.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a leaf on `tape`. Frozen parameters become
    /// constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            tape,
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.trainable))
                .collect(),
        }
    }
}

/// A parameter store bound to one tape.
pub struct Bound<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradient per parameter, in store order (`None` for frozen or unused).
    pub fn collect_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// He normal for ReLU layers with the given fan-in.
    Kaiming(usize),
}

/// Creates named parameters under a dotted prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(self.rng);
                        if v.abs() <= 2.0 * std {
                            break v as f32;
                        }
                    })
                    .collect()
            }
            Init::Kaiming(fan_in) => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(self.rng) as f32).collect()
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Linear> {
        let mut s = self.scope(name);
        let w = s.tensor("weight", &[in_dim, out_dim], Init::TruncNormal(0.02))?;
        let b = if bias {
            Some(s.tensor("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear {
            weight: w,
            bias: b,
            in_dim,
            out_dim,
        })
    }

    /// Square `k×k` convolution with "same" padding.
    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Result<Conv> {
        let mut s = self.scope(name);
        let w = s.tensor("weight", &[out_ch, in_ch, k, k], Init::Kaiming(in_ch * k * k))?;
        let b = s.tensor("bias", &[out_ch], Init::Zeros)?;
        Ok(Conv {
            weight: w,
            bias: b,
            pad: k / 2,
        })
    }

    pub fn layernorm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let mut s = self.scope(name);
        Ok(LayerNorm {
            gamma: s.tensor("gamma", &[dim], Init::Ones)?,
            beta: s.tensor("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn mlp(&mut self, name: &str, dim: usize, hidden: usize, act: Activation) -> Result<Mlp> {
        let mut s = self.scope(name);
        Ok(Mlp {
            fc1: s.linear("fc1", dim, hidden, true)?,
            fc2: s.linear("fc2", hidden, dim, true)?,
            act,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

/// `y = x · W + b` over the last dimension; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(shape_err(
                "linear",
                format!("input {shape:?} for a {}->{} layer", self.in_dim, self.out_dim),
            ));
        }
        let rows = x.numel() / self.in_dim;
        let flat = if shape.len() == 2 {
            x
        } else {
            x.reshape(&[rows, self.in_dim])?
        };
        let mut y = flat.matmul(p.get(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add(p.get(b))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("non-empty") = self.out_dim;
            y.reshape(&out_shape)
        }
    }
}

/// Convolution over `[C,H,W]` with stride 1 and same padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.get(self.weight), Some(p.get(self.bias)), 1, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layernorm(p.get(self.gamma), p.get(self.beta), Self::EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'t, T: Real>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Self::Relu => x.relu(),
            Self::Gelu => x.gelu(),
        }
    }
}

/// Two-layer perceptron `fc2(act(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.act.apply(self.fc1.forward(p, x)?);
        self.fc2.forward(p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_names_and_counts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let mut enc = b.scope("enc");
        enc.linear("proj", 4, 3, true).unwrap();
        enc.layernorm("norm", 3).unwrap();
        assert_eq!(
            store.names().collect::<Vec<_>>(),
            ["enc.proj.weight", "enc.proj.bias", "enc.norm.gamma", "enc.norm.beta"]
        );
        assert_eq!(store.numel(), 12 + 3 + 3 + 3);
        assert_eq!(store.numel_with_prefix("enc.proj"), 15);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros([1]), true).unwrap();
        assert!(store.add("a", Tensor::zeros([1]), true).is_err());
    }

    #[test]
    fn trunc_normal_stays_in_two_sigma() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = ParamBuilder::new(&mut store, &mut rng)
            .tensor("w", &[1000], Init::TruncNormal(0.02))
            .unwrap();
        assert!(store.get(id).value.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn linear_on_3d_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = ParamBuilder::new(&mut store, &mut rng)
            .linear("l", 3, 5, true)
            .unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::ones([2, 4, 3]));
        assert_eq!(lin.forward(&p, x).unwrap().shape(), vec![2, 4, 5]);
        let bad = tape.constant(Tensor::ones([2, 4]));
        assert!(lin.forward(&p, bad).is_err());
    }
}
