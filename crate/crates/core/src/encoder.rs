//! Hierarchical windowed-attention encoder shared by the RGB and depth
//! streams.

use std::rc::Rc;

use crate::attention::{AttentionConfig, SwinOptions, SwinPair};
use crate::autograd::{ResampleMap, Var};
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamBuilder};
use crate::tensor::{Real, Tensor};

pub const PATCH: usize = 4;

/// Row-major `[H·W, c]` tokens on an `H×W` grid.
#[derive(Clone, Copy)]
pub struct FeatureMap<'t, T: Real> {
    pub tokens: Var<'t, T>,
    pub grid: (usize, usize),
}

impl<'t, T: Real> FeatureMap<'t, T> {
    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// `[c, H, W]` layout.
    pub fn to_chw(&self) -> Result<Var<'t, T>> {
        let c = self.channels();
        self.tokens
            .transpose()?
            .reshape(&[c, self.grid.0, self.grid.1])
    }

    pub fn from_chw(x: Var<'t, T>) -> Result<Self> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(shape_err("feature_map", format!("{s:?} is not [C,H,W]")));
        }
        Ok(Self {
            tokens: x.reshape(&[s[0], s[1] * s[2]])?.transpose()?,
            grid: (s[1], s[2]),
        })
    }
}

/// Four levels, finest first.
pub type FeaturePyramid<'t, T> = Vec<FeatureMap<'t, T>>;

/// Min-max normalizes a `[1,H,W]` depth map and replicates it to three
/// channels. A constant map becomes 0.5 everywhere.
pub fn preprocess_depth(depth: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = depth.shape();
    if s.len() != 3 || s[0] != 1 || s[1] == 0 || s[2] == 0 {
        return Err(shape_err("preprocess_depth", format!("{s:?} is not [1,H,W]")));
    }
    let d = depth.data();
    let (lo, hi) = d
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let norm: Vec<f32> = if hi > lo {
        d.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; d.len()]
    };
    let mut out = Vec::with_capacity(3 * norm.len());
    for _ in 0..3 {
        out.extend_from_slice(&norm);
    }
    Tensor::new([3, s[1], s[2]], out)
}

/// Gather taking `[3,H,W]` to non-overlapping `4×4` patches `[H·W/16, 48]`,
/// each row ordered by channel, then patch row, then patch column.
fn patchify_map<T: Real>(c: usize, h: usize, w: usize) -> Result<ResampleMap<T>> {
    let (gh, gw) = (h / PATCH, w / PATCH);
    let row = c * PATCH * PATCH;
    let mut index = Vec::with_capacity(gh * gw * row);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for ky in 0..PATCH {
                    for kx in 0..PATCH {
                        index.push((ch * h + py * PATCH + ky) * w + px * PATCH + kx);
                    }
                }
            }
        }
    }
    ResampleMap::gather(&[c, h, w], &[gh * gw, row], index)
}

/// Gather concatenating each `2×2` neighbourhood of `[H·W,c]` tokens into
/// `[H·W/4, 4c]` in the order (0,0), (1,0), (0,1), (1,1) as (row, col).
fn merge_map<T: Real>(h: usize, w: usize, c: usize) -> Result<ResampleMap<T>> {
    let (oh, ow) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(oh * ow * 4 * c);
    for y in 0..oh {
        for x in 0..ow {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let t = (2 * y + dy) * w + 2 * x + dx;
                index.extend((0..c).map(|ch| t * c + ch));
            }
        }
    }
    ResampleMap::gather(&[h * w, c], &[oh * ow, 4 * c], index)
}

#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: FeatureMap<'t, T>) -> Result<FeatureMap<'t, T>> {
        let (h, w) = x.grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("patch_merging", format!("odd grid {h}x{w}")));
        }
        let c = x.channels();
        let merged = x.tokens.resample(&Rc::new(merge_map(h, w, c)?))?;
        let y = self.reduction.forward(p, self.norm.forward(p, merged)?)?;
        Ok(FeatureMap {
            tokens: y,
            grid: (h / 2, w / 2),
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub merge: Option<PatchMerging>,
    pub pairs: Vec<SwinPair>,
}

impl EncoderStage {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, mut x: FeatureMap<'t, T>) -> Result<FeatureMap<'t, T>> {
        if let Some(m) = &self.merge {
            x = m.forward(p, x)?;
        }
        for pair in &self.pairs {
            x.tokens = pair.forward(p, x.tokens, x.grid)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("encoder");
        let c = cfg.embed_dim;
        let embed = s.linear("patch_embed", 3 * PATCH * PATCH, c, true)?;
        let embed_norm = s.layernorm("patch_norm", c)?;
        let opts = SwinOptions {
            activation: cfg.activation,
            relative_bias: cfg.relative_bias,
        };
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let ci = cfg.width(i);
            let mut st = s.scope(&format!("stage{}", i + 1));
            let merge = if i == 0 {
                None
            } else {
                let prev = cfg.width(i - 1);
                Some(PatchMerging {
                    norm: st.layernorm("merge_norm", 4 * prev)?,
                    reduction: st.linear("merge", 4 * prev, ci, false)?,
                })
            };
            let attn = AttentionConfig::new(ci, cfg.heads[i], cfg.window, cfg.mask_value)?;
            let pairs = (0..cfg.depths[i] / 2)
                .map(|j| SwinPair::build(&mut st, &format!("pair{j}"), &attn, true, opts))
                .collect::<Result<_>>()?;
            stages.push(EncoderStage { merge, pairs });
        }
        Ok(Self {
            embed,
            embed_norm,
            stages,
        })
    }

    /// Encodes one `[3,H,W]` image into a four-level pyramid.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) || s[1] == 0 || s[2] == 0 {
            return Err(shape_err(
                "encoder",
                format!("input {s:?} must be [3,H,W] with H and W multiples of 32"),
            ));
        }
        let patches = image.resample(&Rc::new(patchify_map(3, s[1], s[2])?))?;
        let tokens = self.embed_norm.forward(p, self.embed.forward(p, patches)?)?;
        let mut x = FeatureMap {
            tokens,
            grid: (s[1] / PATCH, s[2] / PATCH),
        };
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(p, x)?;
            levels.push(x);
        }
        Ok(levels)
    }

    /// Runs both streams through the same parameters.
    pub fn encode_pair<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        rgb: Var<'t, T>,
        depth3: Var<'t, T>,
    ) -> Result<(FeaturePyramid<'t, T>, FeaturePyramid<'t, T>)> {
        Ok((self.forward(p, rgb)?, self.forward(p, depth3)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::config::Config;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig) -> (ParamStore<f32>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::build(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
        (store, enc)
    }

    fn image(h: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([3, h, h], |_| rng.random())
    }

    #[test]
    fn depth_is_normalized_and_replicated() {
        let d = Tensor::from_fn([1, 2, 3], |i| 500.0 + 200.0 * i as f32);
        let out = preprocess_depth(&d).unwrap();
        assert_eq!(out.shape(), &[3, 2, 3]);
        assert_eq!(&out.data()[..6], &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(&out.data()[..6], &out.data()[6..12]);
        assert_eq!(&out.data()[6..12], &out.data()[12..]);
        let flat = preprocess_depth(&Tensor::full([1, 4, 4], 7.0)).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn patchify_order() {
        let map = patchify_map::<f64>(3, 8, 8).unwrap();
        let x = Tensor::from_fn([3, 8, 8], |i| i as f64);
        let y = map.apply(&x).unwrap();
        assert_eq!(y.shape(), &[4, 48]);
        // Second patch (top-right), channel 1, row 2, col 3.
        assert_eq!(y.at(&[1, 16 + 2 * 4 + 3]), x.at(&[1, 2, 4 + 3]));
    }

    #[test]
    fn merge_order() {
        let map = merge_map::<f64>(4, 4, 1).unwrap();
        let x = Tensor::from_fn([16, 1], |i| i as f64);
        let y = map.apply(&x).unwrap();
        assert_eq!(&y.data()[..4], &[0.0, 4.0, 1.0, 5.0]);
    }

    #[test]
    fn pyramid_shapes_toy() {
        let cfg = Config::toy().model;
        let (store, enc) = build(&cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let levels = enc.forward(&p, tape.constant(image(64, 1))).unwrap();
        let grids: Vec<_> = levels.iter().map(|l| (l.grid, l.channels())).collect();
        assert_eq!(
            grids,
            [((16, 16), 16), ((8, 8), 32), ((4, 4), 64), ((2, 2), 128)]
        );
    }

    #[test]
    fn identical_inputs_give_identical_pyramids() {
        let cfg = Config::toy().model;
        let (store, enc) = build(&cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let img = tape.constant(image(64, 2));
        let (r, d) = enc.encode_pair(&p, img, img).unwrap();
        for (a, b) in r.iter().zip(&d) {
            assert_eq!(a.tokens.value().data(), b.tokens.value().data());
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = Config::toy().model;
        let (store, enc) = build(&cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let err = enc.forward(&p, tape.constant(image(48, 3))).err().unwrap();
        assert!(err.to_string().contains("multiples of 32"));
    }

    #[test]
    fn chw_round_trip() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let fm = FeatureMap::from_chw(x).unwrap();
        assert_eq!(fm.tokens.shape(), vec![12, 2]);
        assert_eq!(fm.tokens.value().at(&[5, 1]), x.value().at(&[1, 1, 1]));
        assert_eq!(fm.to_chw().unwrap().value().data(), x.value().data());
    }
}
