//! Convolutional refinement of the finest decoder output.

use crate::autograd::Var;
use crate::config::{ModelConfig, UpsampleKind};
use crate::encoder::FeatureMap;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Conv, Linear, ParamBuilder};
use crate::tensor::Real;

/// Name prefix of every refinement parameter.
pub const PREFIX: &str = "cnnr.";
/// Name prefix of the shallow feature extractor.
pub const VGG_PREFIX: &str = "cnnr.vgg.";

pub struct VggFeatures<'t, T: Real> {
    /// `[w0,H,W]`.
    pub full: Var<'t, T>,
    /// `[w1,H/2,W/2]`.
    pub half: Var<'t, T>,
}

/// Two convolution blocks separated by a `2×2` max-pool.
#[derive(Clone, Debug)]
pub struct VggLite {
    pub convs: [Conv; 4],
}

impl VggLite {
    pub fn build(b: &mut ParamBuilder<'_>, widths: [usize; 2]) -> Result<Self> {
        let [w0, w1] = widths;
        let mut s = b.scope("vgg");
        Ok(Self {
            convs: [
                s.conv("conv1_1", 3, w0, 3)?,
                s.conv("conv1_2", w0, w0, 3)?,
                s.conv("conv2_1", w0, w1, 3)?,
                s.conv("conv2_2", w1, w1, 3)?,
            ],
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, rgb: Var<'t, T>) -> Result<VggFeatures<'t, T>> {
        let s = rgb.shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(shape_err("vgg_lite", format!("{s:?} needs even spatial dims")));
        }
        let a = self.convs[0].forward(p, rgb)?.relu();
        let full = self.convs[1].forward(p, a)?.relu();
        let b = self.convs[2].forward(p, full.maxpool2()?)?.relu();
        let half = self.convs[3].forward(p, b)?.relu();
        Ok(VggFeatures { full, half })
    }
}

/// `x + x ⊙ sigmoid(MLP(avgpool(x)))` per channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "{channels} channels are not divisible by reduction {reduction}"
            )));
        }
        let mut s = b.scope(name);
        Ok(Self {
            fc1: s.linear("fc1", channels, channels / reduction, true)?,
            fc2: s.linear("fc2", channels / reduction, channels, true)?,
        })
    }

    /// Per-channel scale `[C,1,1]` in `(0,1)`.
    pub fn scale<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = x.shape()[0];
        let pooled = x.avgpool_global()?.reshape(&[1, c])?;
        let h = self.fc1.forward(p, pooled)?.relu();
        self.fc2.forward(p, h)?.sigmoid().reshape(&[c, 1, 1])
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = self.scale(p, x)?;
        x.add(x.mul(s)?)
    }
}

#[derive(Clone, Debug)]
pub struct Cnnr {
    pub vgg: VggLite,
    pub base1: Conv,
    pub ca1: ChannelAttention,
    pub base2: Conv,
    pub ca2: ChannelAttention,
    pub base3: Conv,
    pub pred: Conv,
    pub upsample: UpsampleKind,
}

impl Cnnr {
    pub fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let [w0, w1] = cfg.cnnr_widths;
        let c1 = cfg.width(0);
        let r = cfg.cnnr_reduction;
        let mut s = b.scope("cnnr");
        Ok(Self {
            vgg: VggLite::build(&mut s, cfg.cnnr_widths)?,
            base1: s.conv("base1", c1, w1, 3)?,
            ca1: ChannelAttention::build(&mut s, "ca1", 2 * w1, r)?,
            base2: s.conv("base2", 2 * w1, w0, 3)?,
            ca2: ChannelAttention::build(&mut s, "ca2", 2 * w0, r)?,
            base3: s.conv("base3", 2 * w0, w0, 3)?,
            pred: s.conv("pred", w0, 1, 3)?,
            upsample: cfg.cnnr_upsample,
        })
    }

    fn up<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.upsample {
            UpsampleKind::Nearest => x.upsample2x(),
            UpsampleKind::Bilinear => {
                let s = x.shape();
                x.resize_bilinear(2 * s[1], 2 * s[2])
            }
        }
    }

    /// Full-resolution saliency map `[H,W]` from the finest decoder stage.
    pub fn refine<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        f_dec1: &FeatureMap<'t, T>,
        v: &VggFeatures<'t, T>,
    ) -> Result<Var<'t, T>> {
        let tape = p.tape();
        let x = f_dec1.to_chw()?;
        let t_half = self.up(self.base1.forward(p, x)?.relu())?;
        if t_half.shape()[1..] != v.half.shape()[1..] {
            return Err(shape_err(
                "refine",
                format!("decoder grid {:?} against shallow features {:?}", f_dec1.grid, v.half.shape()),
            ));
        }
        let a = self.ca1.forward(p, tape.concat(&[t_half, v.half], 0)?)?;
        let t_full = self.up(self.base2.forward(p, a)?.relu())?;
        if t_full.shape()[1..] != v.full.shape()[1..] {
            return Err(shape_err("refine", "upsampled features miss the full-resolution grid"));
        }
        let b = self.ca2.forward(p, tape.concat(&[t_full, v.full], 0)?)?;
        let c = self.base3.forward(p, b)?.relu();
        let s = self.pred.forward(p, c)?.sigmoid();
        let hw = s.shape();
        s.reshape(&[hw[1], hw[2]])
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        f_dec1: &FeatureMap<'t, T>,
        rgb: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let v = self.vgg.forward(p, rgb)?;
        self.refine(p, f_dec1, &v)
    }
}
