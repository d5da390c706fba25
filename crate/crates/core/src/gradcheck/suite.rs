//! Named gradient-check cases for primitives, modules and the full network.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, GradCheckConfig, GradCheckReport};
use crate::attention::{masked_attention, AttentionConfig, MaskMatrix, MultiHeadAttention, SwinOptions, SwinPair};
use crate::autograd::{ResampleMap, Var};
use crate::cmpi::CmpiStage;
use crate::cnnr::Cnnr;
use crate::config::{Config, DecoderKind, ModelConfig};
use crate::data::{generate_sample, Quality};
use crate::decoder::DecoderStage;
use crate::encoder::{preprocess_depth, Encoder, FeatureMap};
use crate::error::{Error, Result};
use crate::loss::{bce_loss, iou_loss, ssim_loss, total_loss};
use crate::model::PicrNet;
use crate::nn::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Module,
    Full,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Self::Op),
            "module" => Ok(Self::Module),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown scope `{s}` (expected op, module or full)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Op => "op",
            Self::Module => "module",
            Self::Full => "full",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: String,
    pub report: GradCheckReport,
}

pub const OP_CASES: &[&str] = &[
    "matmul",
    "matmul_transposed",
    "add_broadcast",
    "sub",
    "mul",
    "div",
    "scalar_ops",
    "relu",
    "sigmoid",
    "gelu",
    "exp",
    "ln",
    "square",
    "clamp",
    "softmax",
    "layernorm",
    "conv2d",
    "conv2d_strided",
    "maxpool2",
    "avgpool_global",
    "upsample2x",
    "resize_bilinear",
    "reflect_pad",
    "broadcast_to",
    "concat",
    "reshape_permute",
    "sum_axis",
    "mean",
];

pub const MODULE_CASES: &[&str] = &[
    "masked_attention",
    "swin_pair",
    "encoder_stage",
    "encoder",
    "cmpi",
    "cmpi_k3",
    "decoder_stage",
    "decoder_stage_conv",
    "cnnr",
    "bce_loss",
    "ssim_loss",
    "iou_loss",
    "total_loss",
];

/// `Σ y_i · sin(1.3 i + 0.7)`: a fixed, asymmetric scalar readout.
fn project<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = Tensor::from_fn(y.shape(), |i| (1.3 * i as f64 + 0.7).sin());
    y.mul(y.tape().constant(w))
        .map(|v| v.sum())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn input(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
    store
        .add(format!("input.{name}"), uniform(rng, shape, lo, hi), true)
        .expect("fresh input name")
}

/// Perturbs every parameter so zero-initialized biases and unit norms do
/// not sit on special values.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    jitter_by_rank(store, rng, scale, scale);
}

/// Like [`jitter`] with separate scales for vectors (biases, norm affines)
/// and higher-rank weights.
fn jitter_by_rank(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, vector: f64, weight: f64) {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.value.rank())).collect();
    for (id, rank) in ids {
        let scale = if rank == 1 { vector } else { weight };
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn run<F>(name: &str, store: &ParamStore<f64>, gc: &GradCheckConfig, f: F) -> Result<CaseReport>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    Ok(CaseReport {
        name: name.to_string(),
        report: check(store, gc, f)?,
    })
}

fn select<'a>(cases: &'a [&'a str], only: Option<&str>) -> Result<Vec<&'a str>> {
    match only {
        None => Ok(cases.to_vec()),
        Some(name) => cases
            .iter()
            .find(|c| **c == name)
            .map(|c| vec![*c])
            .ok_or_else(|| Error::Config(format!("unknown case `{name}` (known: {})", cases.join(", ")))),
    }
}

fn op_case(name: &str, gc: &GradCheckConfig) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed ^ 0x0b5);
    let mut s = ParamStore::new();
    let r = &mut rng;
    match name {
        "matmul" => {
            let (a, b) = (input(&mut s, r, "a", &[3, 4], -1.0, 1.0), input(&mut s, r, "b", &[4, 5], -1.0, 1.0));
            run(name, &s, gc, |p| project(p.get(a).matmul(p.get(b))?))
        }
        "matmul_transposed" => {
            let (a, b) = (input(&mut s, r, "a", &[4, 3], -1.0, 1.0), input(&mut s, r, "b", &[5, 4], -1.0, 1.0));
            run(name, &s, gc, |p| project(p.get(a).matmul_t(p.get(b), true, true)?))
        }
        "add_broadcast" => {
            let (a, b) = (input(&mut s, r, "a", &[3, 4], -1.0, 1.0), input(&mut s, r, "b", &[4], -1.0, 1.0));
            run(name, &s, gc, |p| project(p.get(a).add(p.get(b))?))
        }
        "sub" | "mul" | "div" => {
            let a = input(&mut s, r, "a", &[2, 3, 4], -1.0, 1.0);
            let b = input(&mut s, r, "b", &[2, 1, 4], 0.5, 2.0);
            run(name, &s, gc, |p| {
                let (x, y) = (p.get(a), p.get(b));
                project(match name {
                    "sub" => x.sub(y)?,
                    "mul" => x.mul(y)?,
                    _ => x.div(y)?,
                })
            })
        }
        "scalar_ops" => {
            let a = input(&mut s, r, "a", &[6], -1.0, 1.0);
            run(name, &s, gc, |p| project(p.get(a).scale(-1.7).add_scalar(0.3).rsub_scalar(2.0)))
        }
        "relu" | "sigmoid" | "gelu" | "exp" | "square" => {
            let a = input(&mut s, r, "a", &[4, 5], -2.0, 2.0);
            run(name, &s, gc, |p| {
                let x = p.get(a);
                project(match name {
                    "relu" => x.relu(),
                    "sigmoid" => x.sigmoid(),
                    "gelu" => x.gelu(),
                    "exp" => x.exp(),
                    _ => x.square(),
                })
            })
        }
        "ln" => {
            let a = input(&mut s, r, "a", &[10], 0.2, 3.0);
            run(name, &s, gc, |p| project(p.get(a).ln()))
        }
        "clamp" => {
            let a = input(&mut s, r, "a", &[20], -2.0, 2.0);
            run(name, &s, gc, |p| project(p.get(a).clamp(-1.0, 1.0)))
        }
        "softmax" => {
            let a = input(&mut s, r, "a", &[3, 6], -3.0, 3.0);
            run(name, &s, gc, |p| project(p.get(a).softmax()))
        }
        "layernorm" => {
            let x = input(&mut s, r, "x", &[4, 6], -2.0, 2.0);
            let g = input(&mut s, r, "gamma", &[6], 0.5, 1.5);
            let b = input(&mut s, r, "beta", &[6], -0.5, 0.5);
            run(name, &s, gc, |p| project(p.get(x).layernorm(p.get(g), p.get(b), 1e-5)?))
        }
        "conv2d" | "conv2d_strided" => {
            let stride = if name == "conv2d" { 1 } else { 2 };
            let x = input(&mut s, r, "x", &[2, 7, 5 + stride], -1.0, 1.0);
            let w = input(&mut s, r, "w", &[3, 2, 3, 3], -0.5, 0.5);
            let b = input(&mut s, r, "b", &[3], -0.5, 0.5);
            run(name, &s, gc, |p| project(p.get(x).conv2d(p.get(w), Some(p.get(b)), stride, 1)?))
        }
        "maxpool2" => {
            let x = input(&mut s, r, "x", &[2, 4, 6], -1.0, 1.0);
            run(name, &s, gc, |p| project(p.get(x).maxpool2()?))
        }
        "avgpool_global" => {
            let x = input(&mut s, r, "x", &[3, 4, 5], -1.0, 1.0);
            run(name, &s, gc, |p| project(p.get(x).avgpool_global()?))
        }
        "upsample2x" => {
            let x = input(&mut s, r, "x", &[2, 3, 3], -1.0, 1.0);
            run(name, &s, gc, |p| project(p.get(x).upsample2x()?))
        }
        "resize_bilinear" => {
            let x = input(&mut s, r, "x", &[2, 3, 5], -1.0, 1.0);
            run(name, &s, gc, |p| project(p.get(x).resize_bilinear(7, 2)?))
        }
        "reflect_pad" => {
            let x = input(&mut s, r, "x", &[1, 4, 5], -1.0, 1.0);
            let map = Rc::new(ResampleMap::reflect_pad(1, 4, 5, 2)?);
            run(name, &s, gc, move |p| project(p.get(x).resample(&map)?))
        }
        "broadcast_to" => {
            let x = input(&mut s, r, "x", &[3, 1, 1], -1.0, 1.0);
            run(name, &s, gc, |p| project(p.get(x).broadcast_to(&[3, 2, 4])?))
        }
        "concat" => {
            let (a, b) = (input(&mut s, r, "a", &[2, 3], -1.0, 1.0), input(&mut s, r, "b", &[2, 2], -1.0, 1.0));
            run(name, &s, gc, |p| project(p.tape().concat(&[p.get(a), p.get(b)], 1)?))
        }
        "reshape_permute" => {
            let x = input(&mut s, r, "x", &[2, 3, 4], -1.0, 1.0);
            run(name, &s, gc, |p| {
                project(p.get(x).permute(&[2, 0, 1])?.reshape(&[4, 6])?.transpose()?)
            })
        }
        "sum_axis" => {
            let x = input(&mut s, r, "x", &[3, 4, 2], -1.0, 1.0);
            run(name, &s, gc, |p| project(p.get(x).sum_axis(1)?.mul(p.get(x).mean_axis(1)?)?))
        }
        "mean" => {
            let x = input(&mut s, r, "x", &[3, 4], -1.0, 1.0);
            run(name, &s, gc, |p| Ok(p.get(x).square().mean()))
        }
        _ => Err(Error::Config(format!("unknown op case `{name}`"))),
    }
}

fn toy_model() -> ModelConfig {
    let mut m = Config::toy().model;
    m.input_size = 32;
    m
}

/// Builds a module into a fresh store, returning the `f64` store with
/// inputs still to be added.
fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<M>) -> Result<(ParamStore<f64>, M)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng))?;
    Ok((store.cast(), m))
}

fn fm<'t>(p: &Bound<'t, f64>, id: ParamId, grid: (usize, usize)) -> FeatureMap<'t, f64> {
    FeatureMap {
        tokens: p.get(id),
        grid,
    }
}

fn module_case(name: &str, gc: &GradCheckConfig) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed ^ 0x30d);
    let r = &mut rng;
    let cfg = toy_model();
    match name {
        "masked_attention" => {
            let (mut s, mha) = build(1, |b| MultiHeadAttention::build(b, "attn", 8, 2))?;
            jitter(&mut s, r, 0.1);
            let x = input(&mut s, r, "x", &[4, 8], -1.0, 1.0);
            let mask = MaskMatrix::from_fn(4, -100.0, |i, j| i + j == 3);
            run(name, &s, gc, |p| {
                let x = p.get(x);
                project(masked_attention(p, &mha, x, x, x, &mask)?.output)
            })
        }
        "swin_pair" => {
            let attn = AttentionConfig::new(8, 2, 4, -100.0)?;
            let opts = SwinOptions {
                relative_bias: true,
                ..Default::default()
            };
            let (mut s, pair) = build(2, |b| SwinPair::build(b, "swin", &attn, true, opts))?;
            jitter(&mut s, r, 0.05);
            let x = input(&mut s, r, "x", &[48, 8], -1.0, 1.0);
            run(name, &s, gc, |p| project(pair.forward(p, p.get(x), (8, 6))?))
        }
        "encoder_stage" | "encoder" => {
            let (mut s, enc) = build(3, |b| Encoder::build(b, &cfg))?;
            jitter(&mut s, r, 0.05);
            if name == "encoder_stage" {
                s.set_trainable("", false);
                s.set_trainable("encoder.stage2.", true);
                let x = input(&mut s, r, "x", &[64, cfg.width(0)], -1.0, 1.0);
                run(name, &s, gc, |p| project(enc.stages[1].forward(p, fm(p, x, (8, 8)))?.tokens))
            } else {
                let img = input(&mut s, r, "image", &[3, 32, 32], 0.0, 1.0);
                run(name, &s, gc, |p| {
                    let levels = enc.forward(p, p.get(img))?;
                    let mut total = project(levels[0].tokens)?;
                    for l in &levels[1..] {
                        total = total.add(project(l.tokens)?)?;
                    }
                    Ok(total)
                })
            }
        }
        "cmpi" | "cmpi_k3" => {
            let mut cfg = cfg;
            cfg.cmpi_window = if name == "cmpi" { 1 } else { 3 };
            let (mut s, st) = build(4, |b| CmpiStage::build(b, "cmpi", &cfg, 0))?;
            jitter(&mut s, r, 0.05);
            let c = cfg.width(0);
            let fr = input(&mut s, r, "f_r", &[16, c], -1.0, 1.0);
            let fd = input(&mut s, r, "f_d", &[16, c], -1.0, 1.0);
            let g = s.add("guide", uniform(r, &[4, 4], 0.05, 0.95), false)?;
            run(name, &s, gc, |p| {
                let out = st.forward(p, fm(p, fr, (4, 4)), fm(p, fd, (4, 4)), Some(p.get(g)))?;
                project(out.tokens)
            })
        }
        "decoder_stage" | "decoder_stage_conv" => {
            let mut cfg = cfg;
            if name == "decoder_stage_conv" {
                cfg.decoder = DecoderKind::Conv;
            }
            let (mut s, st) = build(5, |b| DecoderStage::build(b, &cfg, 0))?;
            jitter(&mut s, r, 0.05);
            let f = input(&mut s, r, "f_rd", &[16, cfg.width(0)], -1.0, 1.0);
            let prev = input(&mut s, r, "prev", &[4, cfg.width(1)], -1.0, 1.0);
            run(name, &s, gc, |p| {
                let out = st.forward(p, fm(p, f, (4, 4)), Some(fm(p, prev, (2, 2))))?;
                project(out.tokens)?.add(project(st.side_output(p, &out)?)?)
            })
        }
        "cnnr" => {
            let (mut s, cn) = build(6, |b| Cnnr::build(b, &cfg))?;
            jitter(&mut s, r, 0.05);
            let f = input(&mut s, r, "f_dec1", &[16, cfg.width(0)], -1.0, 1.0);
            let rgb = input(&mut s, r, "rgb", &[3, 16, 16], 0.0, 1.0);
            run(name, &s, gc, |p| project(cn.forward(p, &fm(p, f, (4, 4)), p.get(rgb))?))
        }
        "bce_loss" | "ssim_loss" | "iou_loss" => {
            let mut s = ParamStore::new();
            let logits = input(&mut s, r, "logits", &[8, 8], -2.0, 2.0);
            let g = Tensor::from_fn([8, 8], |i| if (i / 8 + i % 8) % 3 == 0 { 1.0 } else { 0.0 });
            run(name, &s, gc, |p| {
                let sm = p.get(logits).sigmoid();
                match name {
                    "bce_loss" => bce_loss(sm, &g),
                    "ssim_loss" => ssim_loss(sm, &g),
                    _ => iou_loss(sm, &g),
                }
            })
        }
        "total_loss" => {
            let mut s = ParamStore::new();
            let sizes = [8, 4, 2, 1];
            let sides: Vec<_> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| input(&mut s, r, &format!("side{}", i + 1), &[n, n], -2.0, 2.0))
                .collect();
            let out = input(&mut s, r, "out", &[16, 16], -2.0, 2.0);
            let g = Tensor::from_fn([16, 16], |i| if (3..11).contains(&(i / 16)) && (i % 16) > 5 { 1.0 } else { 0.0 });
            run(name, &s, gc, |p| {
                let sv: Vec<_> = sides.iter().map(|&id| p.get(id).sigmoid()).collect();
                Ok(total_loss(&sv, p.get(out).sigmoid(), &g)?.0)
            })
        }
        _ => Err(Error::Config(format!("unknown module case `{name}`"))),
    }
}

pub fn run_ops(gc: &GradCheckConfig, only: Option<&str>) -> Result<Vec<CaseReport>> {
    select(OP_CASES, only)?.into_iter().map(|n| op_case(n, gc)).collect()
}

pub fn run_modules(gc: &GradCheckConfig, only: Option<&str>) -> Result<Vec<CaseReport>> {
    select(MODULE_CASES, only)?.into_iter().map(|n| module_case(n, gc)).collect()
}

/// Full-network loss on one synthetic sample at `model.input_size`.
pub fn run_full(model: &ModelConfig, gc: &GradCheckConfig) -> Result<CaseReport> {
    let (net, store) = PicrNet::build(model, gc.seed)?;
    let mut s: ParamStore<f64> = store.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed ^ 0xf011);
    jitter_by_rank(&mut s, &mut rng, 0.1, 0.01);
    let size = model.input_size;
    let sample = generate_sample(gc.seed, (size, size), Quality::Good)?;
    let rgb: Tensor<f64> = sample.rgb.cast();
    let depth: Tensor<f64> = preprocess_depth(&sample.depth)?.cast();
    let gt: Tensor<f64> = sample.gt.cast();
    run("full", &s, gc, |p| {
        let tape = p.tape();
        let pred = net.forward(p, tape.constant(rgb.clone()), tape.constant(depth.clone()))?;
        Ok(total_loss(&pred.sides, pred.out, &gt)?.0)
    })
}
