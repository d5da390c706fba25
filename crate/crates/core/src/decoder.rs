//! Bottom-up decoder with per-stage side outputs.

use crate::attention::{AttentionConfig, SwinOptions, SwinPair};
use crate::autograd::Var;
use crate::config::{DecoderKind, ModelConfig};
use crate::encoder::FeatureMap;
use crate::error::{shape_err, Result};
use crate::nn::{Bound, Conv, Linear, ParamBuilder};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub enum DecoderBody {
    Transformer(SwinPair),
    /// Two `3×3` convolutions, each followed by ReLU.
    Conv([Conv; 2]),
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    /// Merges the upsampled coarser stage into this one; absent at the
    /// deepest stage.
    pub fuse: Option<Linear>,
    pub body: DecoderBody,
    pub head: Linear,
}

impl DecoderStage {
    /// Builds stage `stage` (0-based, 3 is the deepest).
    pub fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig, stage: usize) -> Result<Self> {
        let c = cfg.width(stage);
        let mut s = b.scope(&format!("decoder.stage{}", stage + 1));
        let fuse = if stage < 3 {
            Some(s.linear("fuse", c + cfg.width(stage + 1), c, true)?)
        } else {
            None
        };
        let body = match cfg.decoder {
            DecoderKind::Transformer => {
                let attn = AttentionConfig::new(c, cfg.heads[stage], cfg.window, cfg.mask_value)?;
                let opts = SwinOptions {
                    activation: cfg.activation,
                    relative_bias: cfg.relative_bias,
                };
                DecoderBody::Transformer(SwinPair::build(&mut s, "swin", &attn, cfg.decoder_shift, opts)?)
            }
            DecoderKind::Conv => DecoderBody::Conv([s.conv("conv1", c, c, 3)?, s.conv("conv2", c, c, 3)?]),
        };
        let head = s.linear("head", c, 1, true)?;
        Ok(Self { fuse, body, head })
    }

    /// Decodes the fused features of this stage, given the output of the
    /// coarser stage when there is one.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        f_rd: FeatureMap<'t, T>,
        prev: Option<FeatureMap<'t, T>>,
    ) -> Result<FeatureMap<'t, T>> {
        let x = match (&self.fuse, prev) {
            (Some(fuse), Some(prev)) => {
                let up = FeatureMap::from_chw(prev.to_chw()?.upsample2x()?)?;
                if up.grid != f_rd.grid {
                    return Err(shape_err(
                        "decode_stage",
                        format!("upsampled grid {:?} does not match {:?}", up.grid, f_rd.grid),
                    ));
                }
                fuse.forward(p, p.tape().concat(&[f_rd.tokens, up.tokens], 1)?)?
            }
            (None, None) => f_rd.tokens,
            (Some(_), None) => return Err(shape_err("decode_stage", "missing coarser stage output")),
            (None, Some(_)) => return Err(shape_err("decode_stage", "deepest stage takes no coarser input")),
        };
        let tokens = match &self.body {
            DecoderBody::Transformer(pair) => pair.forward(p, x, f_rd.grid)?,
            DecoderBody::Conv(convs) => {
                let mut y = FeatureMap { tokens: x, grid: f_rd.grid }.to_chw()?;
                for conv in convs {
                    y = conv.forward(p, y)?.relu();
                }
                FeatureMap::from_chw(y)?.tokens
            }
        };
        Ok(FeatureMap { tokens, grid: f_rd.grid })
    }

    /// Side-output saliency map `[H,W]` in `(0,1)`.
    pub fn side_output<'t, T: Real>(&self, p: &Bound<'t, T>, f: &FeatureMap<'t, T>) -> Result<Var<'t, T>> {
        self.head
            .forward(p, f.tokens)?
            .sigmoid()
            .reshape(&[f.grid.0, f.grid.1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::config::Config;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig, stage: usize) -> (ParamStore<f64>, DecoderStage) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = DecoderStage::build(&mut ParamBuilder::new(&mut store, &mut rng), cfg, stage).unwrap();
        (store.cast(), st)
    }

    fn fm<'t>(tape: &'t Tape<f64>, n: usize, c: usize, grid: (usize, usize), seed: u64) -> FeatureMap<'t, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            tokens: tape.constant(Tensor::from_fn([n, c], |_| rng.random_range(-1.0..1.0))),
            grid,
        }
    }

    #[test]
    fn stage_shapes() {
        for kind in [DecoderKind::Transformer, DecoderKind::Conv] {
            let mut cfg = Config::toy().model;
            cfg.decoder = kind;
            let (store, deep) = build(&cfg, 3);
            let (store3, mid) = build(&cfg, 2);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let out4 = deep.forward(&p, fm(&tape, 4, 128, (2, 2), 1), None).unwrap();
            assert_eq!((out4.grid, out4.channels()), ((2, 2), 128));
            let p3 = store3.bind(&tape);
            let out3 = mid.forward(&p3, fm(&tape, 16, 64, (4, 4), 2), Some(out4)).unwrap();
            assert_eq!((out3.grid, out3.channels()), ((4, 4), 64));
            assert_eq!(mid.fuse.as_ref().unwrap().in_dim, 64 + 128);
            assert!(mid.forward(&p3, fm(&tape, 16, 64, (4, 4), 2), None).is_err());
            let bad = fm(&tape, 9, 128, (3, 3), 3);
            assert!(mid.forward(&p3, fm(&tape, 16, 64, (4, 4), 2), Some(bad)).is_err());
        }
    }

    #[test]
    fn zero_inputs_give_zero_output() {
        let cfg = Config::toy().model;
        let (store, st) = build(&cfg, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let zero = |n, c, g| FeatureMap { tokens: tape.constant(Tensor::zeros([n, c])), grid: g };
        let out = st.forward(&p, zero(16, 64, (4, 4)), Some(zero(4, 128, (2, 2)))).unwrap();
        assert!(out.tokens.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn side_output_examples() {
        let cfg = Config::toy().model;
        let (mut store, st) = build(&cfg, 3);
        let tape = Tape::new();
        let f = fm(&tape, 4, 128, (2, 2), 4);
        let s = st.side_output(&store.bind(&tape), &f).unwrap();
        assert_eq!(s.shape(), vec![2, 2]);
        assert!(s.value().data().iter().all(|&v| v > 0.0 && v < 1.0));

        *store.value_mut(st.head.weight) = Tensor::zeros([128, 1]);
        let s = st.side_output(&store.bind(&tape), &f).unwrap();
        assert!(s.value().data().iter().all(|&v| v == 0.5));
        *store.value_mut(st.head.bias.unwrap()) = Tensor::full([1], 20.0);
        let s = st.side_output(&store.bind(&tape), &f).unwrap();
        assert!(s.value().data().iter().all(|&v| v > 1.0 - 1e-8));
    }
}
