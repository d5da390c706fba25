//! The assembled network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::cmpi::CmpiStage;
use crate::cnnr::{self, Cnnr};
use crate::config::ModelConfig;
use crate::decoder::DecoderStage;
use crate::encoder::{Encoder, FeatureMap};
use crate::error::{shape_err, Result};
use crate::nn::{Bound, ParamBuilder, ParamStore};
use crate::tensor::Real;

/// Network outputs for one sample.
pub struct Prediction<'t, T: Real> {
    /// Side outputs `S_1..S_4`, finest first, each `[H_i,W_i]`.
    pub sides: Vec<Var<'t, T>>,
    /// Final map `[H,W]`.
    pub out: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct PicrNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub cmpi: Vec<CmpiStage>,
    pub decoder: Vec<DecoderStage>,
    pub cnnr: Option<Cnnr>,
}

impl PicrNet {
    /// Builds the network and its freshly initialized parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let encoder = Encoder::build(&mut b, cfg)?;
        let cmpi = (0..4)
            .map(|i| CmpiStage::build(&mut b, &format!("cmpi.stage{}", i + 1), cfg, i))
            .collect::<Result<_>>()?;
        let decoder = (0..4)
            .map(|i| DecoderStage::build(&mut b, cfg, i))
            .collect::<Result<_>>()?;
        let cnnr = if cfg.cnnr_enabled {
            Some(Cnnr::build(&mut b, cfg)?)
        } else {
            None
        };
        if cfg.cnnr_freeze {
            store.set_trainable(cnnr::VGG_PREFIX, false);
        }
        let net = Self {
            config: cfg.clone(),
            encoder,
            cmpi,
            decoder,
            cnnr,
        };
        Ok((net, store))
    }

    /// Runs the network on a `[3,H,W]` image and its preprocessed `[3,H,W]`
    /// depth map.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        rgb: Var<'t, T>,
        depth3: Var<'t, T>,
    ) -> Result<Prediction<'t, T>> {
        let size = self.config.input_size;
        for (name, x) in [("rgb", rgb), ("depth", depth3)] {
            if x.shape() != [3, size, size] {
                return Err(shape_err(
                    "picr_net",
                    format!("{name} input {:?} does not match the configured size [3,{size},{size}]", x.shape()),
                ));
            }
        }
        let (f_r, f_d) = self.encoder.encode_pair(p, rgb, depth3)?;
        let mut sides: Vec<Option<Var<'t, T>>> = vec![None; 4];
        let mut prev: Option<FeatureMap<'t, T>> = None;
        for i in (0..4).rev() {
            let (h, w) = f_r[i].grid;
            let guide = match sides.get(i + 1).copied().flatten() {
                Some(s) => {
                    let hw = s.shape();
                    Some(s.reshape(&[1, hw[0], hw[1]])?.resize_bilinear(h, w)?.reshape(&[h, w])?)
                }
                None => None,
            };
            let f_rd = self.cmpi[i].forward(p, f_r[i], f_d[i], guide)?;
            let dec = self.decoder[i].forward(p, f_rd, prev)?;
            sides[i] = Some(self.decoder[i].side_output(p, &dec)?);
            prev = Some(dec);
        }
        let sides: Vec<Var<'t, T>> = sides.into_iter().map(|s| s.expect("all stages decoded")).collect();
        let finest = prev.expect("four stages");
        let out = match &self.cnnr {
            Some(c) => c.forward(p, &finest, rgb)?,
            None => {
                let s1 = sides[0];
                let hw = s1.shape();
                s1.reshape(&[1, hw[0], hw[1]])?
                    .resize_bilinear(size, size)?
                    .reshape(&[size, size])?
            }
        };
        Ok(Prediction { sides, out })
    }
}
